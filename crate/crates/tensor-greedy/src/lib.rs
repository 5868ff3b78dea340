//! Greedy rank-one tensor methods for pricing European basket options.
//!
//! The crate decomposes high-dimensional payoff functions into short sums of
//! tensor products of one-dimensional P1 finite element functions, advances
//! them through the Black-Scholes equation (mapped to the unit cube) with an
//! implicit-explicit Euler scheme that enriches the separated representation
//! greedily at each step, and uses the resulting price surface as a control
//! variate for Monte-Carlo pricing.
//!
//! Module layout:
//!
//! * [`fem1d`]: uniform P1 elements on [0, 1] and the weighted tridiagonal
//!   matrices of the separated operator,
//! * [`tensor`]: separated (sum-of-rank-one) functions on the cube,
//! * [`greedy_l2`]: greedy rank-one decomposition of payoff-like targets,
//! * [`bs_model`]: market model validation, coordinate map, stability bound,
//!   and closed-form references,
//! * [`pde_greedy`]: the time stepper and its bilinear forms,
//! * [`mc`]: Monte-Carlo pricing with the PDE-driven control variate.

pub mod bs_model;
pub mod error;
pub mod fem1d;
pub mod greedy_l2;
pub mod mc;
pub mod pde_greedy;
pub mod tensor;

pub use error::{Error, Result};

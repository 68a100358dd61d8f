//! Desk-scale numerical laboratory for the heat kernel of divergence-form
//! operators `-div(a grad u) + b . grad u` with measurable uniformly elliptic
//! `a` and locally unbounded drift `b`.
//!
//! The crate is organised around a uniform grid truncation of whole space:
//!
//! * [`grid`] — grids, sampled scalar/vector/matrix fields, ellipticity probes;
//! * [`heat`] — the Gaussian kernel family, the free heat semigroup as a
//!   separable discrete convolution, and the heat-semigroup mollifier;
//! * [`catalog`] — analytic library of drift and diffusion-matrix fields with
//!   closed-form singularity data used as test oracles;
//! * [`norms`] — drift-class functionals (Nash and Kato type norms, weighted
//!   and fractional variants), form-bound envelopes and derived constants;
//! * [`solver`] — conservative finite-volume discretisation and extraction of
//!   the discrete fundamental solution;
//! * [`nashfn`] — Nash-type weighted Dirichlet functionals of kernel tables
//!   and the auxiliary Gaussian kernel identities;
//! * [`duhamel`] — the drift perturbation series, its contraction constant and
//!   the derived upper/lower kernel envelopes;
//! * [`bounds`] — a posteriori verification: Gaussian envelope fits, mass
//!   conservation, Harnack ratios, Hölder exponents, operator-norm traces and
//!   approximation-convergence studies;
//! * [`experiment`] — batch experiment configuration and orchestration used by
//!   the command line front-end.
//!
//! Every quantity reported by the crate carries its numerical provenance:
//! quadrature error estimates, boundary-leakage accounting and explicit
//! finite/divergent verdicts. Nothing is extrapolated silently.

pub mod bounds;
pub mod catalog;
pub mod duhamel;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod heat;
pub mod io;
pub mod nashfn;
pub mod norms;
pub mod quad;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{EllipticityWindow, FieldRank, GridSpec, SampledField};
pub use heat::GaussianKernelParams;

/// Crate version string recorded in run manifests.
pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

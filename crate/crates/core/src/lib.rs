//! Texture-dependent flow-error likelihoods and robust ego-motion.
//!
//! Two-frame optical flow errors are modelled per eigen-direction of the
//! local structure tensor as a Laplace-Cauchy mixture whose parameters are
//! looked up by texture ([`likelihood`]). The mixture drives LCMSAC, a
//! sample-consensus pose estimator compared against Gaussian RANSAC
//! ([`egomotion`]). [`synth`] renders textured-plane sequences with exact
//! depth and flow, [`flow`] holds dense and sparse Lucas-Kanade, and
//! [`pipeline`] and [`experiment`] tie them into calibration and odometry
//! runs behind the `lcmflow` command line tool ([`cli`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod egomotion;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod geometry;
pub mod imaging;
pub mod likelihood;
pub mod optim;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};

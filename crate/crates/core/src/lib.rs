//! Verified feature-level explanations for feedforward ReLU classifiers.
//!
//! An explanation splits the input features into an irrelevant set `R`, whose
//! joint perturbation by `epsilon` provably cannot change the prediction, and
//! the remaining features, optionally refined into counterfactual features
//! `C` (with a concrete witness) and unresolved features `U`.

pub mod attack;
pub mod bab;
pub mod bounds;
pub mod cli;
pub mod error;
pub mod explain;
pub mod lp;
pub mod model;

pub use error::{Error, Result};

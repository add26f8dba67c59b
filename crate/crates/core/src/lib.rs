//! Tabular conservative Peng's Q(lambda) on finite MDPs.
//!
//! `no_std` with `alloc`. Dense linear algebra goes through `nalgebra`,
//! randomness through `ChaCha8Rng` streams derived by [`seed::split_seed`].

#![no_std]

extern crate alloc;

pub mod cpql;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod linalg;
pub mod mdp;
pub mod online;
pub mod operators;
pub mod seed;
pub mod theory;

pub use error::{Error, Result};
pub use mdp::{FiniteMdp, QTable, TabularPolicy, TieBreak, VTable, VisitDist};

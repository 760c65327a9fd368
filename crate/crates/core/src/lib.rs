#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod orca;
pub mod synthetic;
pub mod train;
pub mod trajectories;

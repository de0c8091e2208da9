//! Config-file driven front end for the `tqdiff-core` solvers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod runner;

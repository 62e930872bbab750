#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod qlinalg;
pub mod model;
pub mod cascade;
pub mod correlations;
pub mod teleport;
pub mod oracle;
pub mod cli;

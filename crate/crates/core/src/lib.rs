#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod ingest;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod train;

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agents;
pub mod market;
pub mod netmodel;
pub mod plp;
pub mod harness;
pub mod protocol;

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bandit_algos;
pub mod bandit_env;
pub mod confidence;
pub mod harness;
pub mod linalg;
pub mod rl_algos;
pub mod rl_env;
pub mod rng;

mod attention;
mod basic;
mod nn;

pub use basic::Reduction;
pub use nn::{conv1d_out_len, RunningStats, UpdatedStats, BATCHNORM_EPS, BATCHNORM_MOMENTUM, LAYERNORM_EPS};

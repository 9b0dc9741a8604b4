//! Parameter binding and initialisation shared by the encoder and decoder.

use std::collections::HashMap;

use cardiocap_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Where a forward pass gets its parameters from.
pub trait Params<T: Scalar> {
    fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<Var>;
    /// Non-trainable state such as batch-norm running statistics.
    fn buffer(&self, name: &str) -> Result<&[T]>;
}

impl<T: Scalar> Params<T> for ParamStore<T> {
    fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(self, name)?)
    }

    fn buffer(&self, name: &str) -> Result<&[T]> {
        Ok(self.tensor(name)?.data())
    }
}

/// Parameters already present in a graph (for example as gradient-check
/// inputs), falling back to a store for anything not listed.
pub struct BoundParams<'a, T> {
    pub vars: HashMap<String, Var>,
    pub fallback: &'a ParamStore<T>,
}

impl<T: Scalar> Params<T> for BoundParams<'_, T> {
    fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(&v) => Ok(v),
            None => self.fallback.bind(g, name),
        }
    }

    fn buffer(&self, name: &str) -> Result<&[T]> {
        self.fallback.buffer(name)
    }
}

/// Weight `[fan_in, fan_out]` and bias drawn from U(±1/√fan_in).
pub(crate) fn init_linear<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
    store.insert(format!("{prefix}.b"), Tensor::uniform(&[fan_out], bound, rng));
}

/// `x @ w + b` over the last axis.
pub(crate) fn linear<T: Scalar, P: Params<T>>(g: &mut Graph<T>, p: &P, prefix: &str, x: Var) -> Result<Var> {
    let w = p.bind(g, &format!("{prefix}.w"))?;
    let b = p.bind(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

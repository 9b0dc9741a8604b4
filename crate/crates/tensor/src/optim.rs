//! Adam optimiser.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam with per-parameter first/second moments and step counters.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, state: HashMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Number of updates applied so far to `name`.
    pub fn steps(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.step)
    }

    /// Updates exactly the named parameters; each must carry a gradient.
    /// Gradients are cleared afterwards.
    pub fn step_named<T: Scalar>(&mut self, store: &mut ParamStore<T>, names: &[&str]) -> Result<()> {
        for name in names {
            if store.get(name)?.grad.is_none() {
                return Err(TensorError::MissingGrad(name.to_string()));
            }
        }
        for name in names {
            self.update(store, name)?;
        }
        Ok(())
    }

    /// Updates every trainable, unfrozen parameter that holds a gradient and
    /// clears all gradients. Returns the number of parameters updated.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<usize> {
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.requires_grad() && p.grad.is_some())
            .map(|(n, _)| n.to_string())
            .collect();
        for name in &names {
            self.update(store, name)?;
        }
        store.zero_grad();
        Ok(names.len())
    }

    fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: &str) -> Result<()> {
        let cfg = self.cfg;
        let p = store.get_mut(name)?;
        let grad = p.grad.take().ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
        let n = grad.len();
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        st.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        let data = p.value.data_mut();
        for i in 0..n {
            let g = grad[i].as_f64();
            st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
            st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            data[i] = T::of(data[i].as_f64() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "adam_step" });
        }
        Ok(())
    }
}

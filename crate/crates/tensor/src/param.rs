use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::{Scalar, Tensor};

/// A named model tensor plus its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    /// Buffers (e.g. batch-norm running statistics) are never trainable.
    pub trainable: bool,
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn requires_grad(&self) -> bool {
        self.trainable && !self.frozen
    }
}

/// Ordered collection of named parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(
            name.into(),
            Param { value, grad: None, trainable: true, frozen: false },
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(
            name.into(),
            Param { value, grad: None, trainable: false, frozen: false },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.value)
    }

    /// Overwrites the value of an existing entry, keeping its flags.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Sets the frozen flag on every entry whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<()> {
        let p = self.get_mut(name)?;
        if grad.len() != p.value.numel() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &g)| *a += g),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    /// Copies every entry of `other` whose name passes `filter` into this
    /// store, requiring identical shapes for names that already exist.
    pub fn load_from(&mut self, other: &ParamStore<T>, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in other.iter() {
            if !filter(name) {
                continue;
            }
            match self.params.get_mut(name) {
                Some(mine) => {
                    if mine.value.shape() != p.value.shape() {
                        return Err(TensorError::Shape {
                            op: "load_from",
                            lhs: mine.value.shape().to_vec(),
                            rhs: p.value.shape().to_vec(),
                        });
                    }
                    mine.value = p.value.clone();
                }
                None => {
                    self.params.insert(name.to_string(), Param { grad: None, ..p.clone() });
                }
            }
            copied += 1;
        }
        Ok(copied)
    }

    pub fn to_tensor_map(&self) -> IndexMap<String, Tensor<T>> {
        self.params.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_by_prefix() {
        let mut s = ParamStore::<f32>::new();
        s.insert("enc.a", Tensor::zeros(&[2]));
        s.insert("dec.a", Tensor::zeros(&[2]));
        s.set_frozen("enc.", true);
        assert!(!s.get("enc.a").unwrap().requires_grad());
        assert!(s.get("dec.a").unwrap().requires_grad());
    }

    #[test]
    fn grads_accumulate() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[2]));
        s.accumulate_grad("w", &[1.0, 2.0]).unwrap();
        s.accumulate_grad("w", &[0.5, 0.5]).unwrap();
        assert_eq!(s.get("w").unwrap().grad.as_deref(), Some(&[1.5, 2.5][..]));
        assert!(s.accumulate_grad("w", &[f64::NAN, 0.0]).is_err());
    }
}

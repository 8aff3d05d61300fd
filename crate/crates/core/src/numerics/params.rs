//! Named parameter store with gradient accumulators and the
//! adaptive-moment update rule.

use std::collections::BTreeMap;

use rand::Rng;

use super::mat::{Mat, NumericsError};

struct Param {
    value: Mat,
    grad: Option<Mat>,
    moment1: Mat,
    moment2: Mat,
    step: u64,
}

/// Map from parameter path to value, gradient accumulator, and optimizer
/// state. Paths are unique; iteration order is the sorted path order so
/// every pass over the store is deterministic.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: &str, value: Mat) -> Result<(), NumericsError> {
        if self.params.contains_key(path) {
            return Err(NumericsError::DuplicateParam {
                path: path.to_string(),
            });
        }
        let (r, c) = value.shape();
        self.params.insert(
            path.to_string(),
            Param {
                value,
                grad: None,
                moment1: Mat::zeros(r, c),
                moment2: Mat::zeros(r, c),
                step: 0,
            },
        );
        Ok(())
    }

    pub fn value(&self, path: &str) -> Result<&Mat, NumericsError> {
        self.params
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| NumericsError::UnknownParam {
                path: path.to_string(),
            })
    }

    pub fn grad(&self, path: &str) -> Option<&Mat> {
        self.params.get(path).and_then(|p| p.grad.as_ref())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    /// Parameter paths in sorted order.
    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    /// Number of registered parameter tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Accumulate a gradient contribution (summed across backward passes).
    pub fn add_grad(&mut self, path: &str, delta: &Mat) -> Result<(), NumericsError> {
        let param = self
            .params
            .get_mut(path)
            .ok_or_else(|| NumericsError::UnknownParam {
                path: path.to_string(),
            })?;
        if param.value.shape() != delta.shape() {
            return Err(NumericsError::DimMismatch {
                op: "add_grad",
                left: param.value.shape(),
                right: delta.shape(),
            });
        }
        match &mut param.grad {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            None => param.grad = Some(delta.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Scale all accumulated gradients, e.g. by `1/batch_size`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v *= factor;
                }
            }
        }
    }

    /// Overwrite one scalar entry of a parameter. Finite-difference probing
    /// uses this to shift an element and restore it bit-exactly.
    pub fn set_elem(&mut self, path: &str, index: usize, value: f64) -> Result<(), NumericsError> {
        let param = self
            .params
            .get_mut(path)
            .ok_or_else(|| NumericsError::UnknownParam {
                path: path.to_string(),
            })?;
        if index >= param.value.len() {
            return Err(NumericsError::IndexOutOfRange {
                op: "set_elem",
                index,
                len: param.value.len(),
            });
        }
        param.value.data_mut()[index] = value;
        Ok(())
    }

    /// One bias-corrected adaptive-moment update for every parameter.
    ///
    /// Requires a populated gradient on each parameter; gradients are
    /// consumed (zeroed) by the step.
    pub fn adam_step(
        &mut self,
        lr: f64,
        betas: (f64, f64),
        eps: f64,
    ) -> Result<(), NumericsError> {
        let (b1, b2) = betas;
        for (path, p) in self.params.iter_mut() {
            let grad = p.grad.take().ok_or_else(|| NumericsError::MissingGrad {
                path: path.clone(),
            })?;
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for i in 0..p.value.len() {
                let g = grad.data()[i];
                let m = b1 * p.moment1.data()[i] + (1.0 - b1) * g;
                let v = b2 * p.moment2.data()[i] + (1.0 - b2) * g * g;
                p.moment1.data_mut()[i] = m;
                p.moment2.data_mut()[i] = v;
                let mhat = m / c1;
                let vhat = v / c2;
                p.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Replace a parameter's value, keeping shape. Used by checkpoint loading.
    pub fn set_value(&mut self, path: &str, value: Mat) -> Result<(), NumericsError> {
        let param = self
            .params
            .get_mut(path)
            .ok_or_else(|| NumericsError::UnknownParam {
                path: path.to_string(),
            })?;
        if param.value.shape() != value.shape() {
            return Err(NumericsError::DimMismatch {
                op: "set_value",
                left: param.value.shape(),
                right: value.shape(),
            });
        }
        param.value = value;
        Ok(())
    }
}

/// Fan-scaled uniform weight initialization: `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Mat::from_vec(fan_in, fan_out, data).expect("shape matches data")
}

use super::tape::Gradients;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Trainable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            step: 0,
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the tape gradients into each parameter's `grad` buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            if let Some(g) = g {
                let p = &mut self.params[id.0];
                for (acc, &x) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc = *acc + x;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn ensure_finite_grads(&self) -> Result<()> {
        for p in &self.params {
            p.grad
                .ensure_finite(&format!("gradient of {}", p.name))?;
        }
        Ok(())
    }

    /// Copies values from `other` by name; shapes must match.
    pub fn load_values(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, value) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint has unknown parameter {name}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?} vs model {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        if other.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    first_moment: p.first_moment.cast(),
                    second_moment: p.second_moment.cast(),
                    step: p.step,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// One bias-corrected Adam update over every parameter. Gradients are
    /// left in place; callers clear them.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) {
        for p in &mut store.params {
            p.step += 1;
            let t = p.step as i32;
            let c1 = T::of(1.0 - self.beta1.powi(t));
            let c2 = T::of(1.0 - self.beta2.powi(t));
            let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
            let (lr, eps) = (T::of(self.lr), T::of(self.eps));
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let w = p.value.data_mut();
            for (i, &g) in p.grad.data().iter().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
